//! Masking plans for the six NLE-aware pretraining strategies.
//!
//! A plan fixes, for one document, which tokens are selected for MLM
//! prediction, what happens to each selected token (mask / random / keep),
//! and whether the NLE-classification labels travel with the record.
//!
//! | strategy          | SLE maskable | FNLE maskable | NLEC |
//! |-------------------|:------------:|:-------------:|:----:|
//! | `vanilla-mlm`     | yes          | yes           |      |
//! | `replace-all`     | (rewritten)  | (rewritten)   |      |
//! | `vanilla-nlec`    | yes          | yes           | yes  |
//! | `mask-semis`      | yes          |               |      |
//! | `mask-semis-nlec` | yes          |               | yes  |
//! | `mask-none-nlec`  |              |               | yes  |
//!
//! Selection is an independent Bernoulli draw per eligible token. Excluded
//! tokens do not give their probability mass to anyone else, so NLE-dense
//! documents end up with fewer masked positions overall.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::align::{checked_sorted_spans, AlignError, TokenNleLabels, TokenizedDoc};
use crate::nle::{is_fnle_code, NleSpan};

/// Label value for positions that carry no training target.
pub const IGNORE_INDEX: i64 = -100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("label count {labels} does not match token count {tokens}")]
    Alignment { labels: usize, tokens: usize },
    #[error("invalid strategy config: {0}")]
    Config(String),
    #[error("replace-all plans are built from a rewritten, re-tokenized document; use plan_rewritten")]
    ReplaceAllNeedsRewrite,
    #[error(transparent)]
    Spans(#[from] AlignError),
    #[error("malformed training record: {0}")]
    Record(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    VanillaMlm,
    ReplaceAll,
    VanillaNlec,
    MaskSemis,
    MaskSemisNlec,
    MaskNoneNlec,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::VanillaMlm,
        Strategy::ReplaceAll,
        Strategy::VanillaNlec,
        Strategy::MaskSemis,
        Strategy::MaskSemisNlec,
        Strategy::MaskNoneNlec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::VanillaMlm => "vanilla-mlm",
            Strategy::ReplaceAll => "replace-all",
            Strategy::VanillaNlec => "vanilla-nlec",
            Strategy::MaskSemis => "mask-semis",
            Strategy::MaskSemisNlec => "mask-semis-nlec",
            Strategy::MaskNoneNlec => "mask-none-nlec",
        }
    }

    pub fn nlec_enabled(self) -> bool {
        matches!(
            self,
            Strategy::VanillaNlec | Strategy::MaskSemisNlec | Strategy::MaskNoneNlec
        )
    }

    /// Whether a token with NLE label `code` may be selected for masking.
    pub fn allows_code(self, code: u8) -> bool {
        match self {
            Strategy::VanillaMlm | Strategy::ReplaceAll | Strategy::VanillaNlec => true,
            Strategy::MaskSemis | Strategy::MaskSemisNlec => !is_fnle_code(code),
            Strategy::MaskNoneNlec => code == 0,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace(['_', '+', ' '], "-");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| PlanError::Config(format!("unknown strategy `{s}`")))
    }
}

/// `(mask, random, keep)` fractions for selected tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionSplit {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for ActionSplit {
    fn default() -> Self {
        ActionSplit {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub mask_prob: f64,
    pub action_split: ActionSplit,
    pub nlec_loss_scale: f64,
    pub seed: u64,
    pub vocab_size: u32,
    pub mask_token_id: u32,
    pub special_token_ids: BTreeSet<u32>,
}

/// RoBERTa-base vocabulary: `<s>`=0, `<pad>`=1, `</s>`=2, `<unk>`=3, `<mask>`=50264.
pub const ROBERTA_VOCAB_SIZE: u32 = 50265;
pub const ROBERTA_MASK_ID: u32 = 50264;
pub const ROBERTA_SPECIAL_IDS: [u32; 5] = [0, 1, 2, 3, 50264];

impl StrategyConfig {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        StrategyConfig {
            strategy,
            mask_prob: 0.15,
            action_split: ActionSplit::default(),
            nlec_loss_scale: 0.1,
            seed,
            vocab_size: ROBERTA_VOCAB_SIZE,
            mask_token_id: ROBERTA_MASK_ID,
            special_token_ids: ROBERTA_SPECIAL_IDS.into_iter().collect(),
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: String| Err(PlanError::Config(m));
        let s = self.action_split;
        if [s.mask, s.random, s.keep].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad(format!("action split fractions must lie in [0, 1]: {s:?}"));
        }
        if (s.mask + s.random + s.keep - 1.0).abs() > 1e-9 {
            return bad(format!("action split must sum to 1: {s:?}"));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return bad(format!("mask_prob must be in (0, 1), got {}", self.mask_prob));
        }
        if !(self.nlec_loss_scale >= 0.0 && self.nlec_loss_scale.is_finite()) {
            return bad(format!("nlec_loss_scale must be >= 0, got {}", self.nlec_loss_scale));
        }
        if !self.special_token_ids.contains(&self.mask_token_id) {
            return bad(format!("mask token {} must be a special token", self.mask_token_id));
        }
        let specials_in_vocab = self.special_token_ids.range(..self.vocab_size).count() as u32;
        if s.random > 0.0 && specials_in_vocab >= self.vocab_size {
            return bad("vocabulary has no non-special token to draw random replacements from".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingPlan {
    pub doc_id: String,
    pub strategy: Strategy,
    /// Sorted, unique token indices chosen for prediction.
    pub selected: Vec<usize>,
    /// Parallel to `selected`.
    pub actions: Vec<MaskAction>,
    /// One replacement id per `Random` action, in order.
    pub random_ids: Vec<u32>,
    /// Original token id at each selected index.
    pub mlm_labels: Vec<u32>,
    pub nlec_labels: Option<TokenNleLabels>,
    pub rewritten_text: Option<String>,
    pub nlec_enabled: bool,
    pub nlec_loss_scale: f64,
    pub mask_token_id: u32,
}

impl MaskingPlan {
    /// Token ids after applying every action.
    pub fn apply(&self, token_ids: &[u32]) -> Vec<u32> {
        let mut out = token_ids.to_vec();
        let mut randoms = self.random_ids.iter();
        for (&i, &a) in self.selected.iter().zip(&self.actions) {
            match a {
                MaskAction::Mask => out[i] = self.mask_token_id,
                MaskAction::Random => {
                    out[i] = *randoms.next().expect("one random id per random action");
                }
                MaskAction::Keep => {}
            }
        }
        out
    }
}

/// Seeds a per-document stream from `(seed, doc_id)` so a document's plan
/// does not depend on where it sits in the corpus.
pub fn document_rng(seed: u64, doc_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"nlekit-plan-v1");
    h.update(seed.to_le_bytes());
    h.update((doc_id.len() as u64).to_le_bytes());
    h.update(doc_id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Builds the plan for every strategy except replace-all.
pub fn plan(
    doc: &TokenizedDoc,
    labels: &TokenNleLabels,
    cfg: &StrategyConfig,
) -> Result<MaskingPlan, PlanError> {
    if cfg.strategy == Strategy::ReplaceAll {
        return Err(PlanError::ReplaceAllNeedsRewrite);
    }
    plan_inner(doc, labels, cfg, cfg.strategy)
}

/// Plans a replace-all document. `doc` must be the rewritten text re-tokenized
/// by the external tokenizer; masking follows vanilla MLM with no NLEC head.
pub fn plan_rewritten(doc: &TokenizedDoc, cfg: &StrategyConfig) -> Result<MaskingPlan, PlanError> {
    let labels = TokenNleLabels::zeros(doc.len());
    let mut p = plan_inner(doc, &labels, cfg, Strategy::ReplaceAll)?;
    p.rewritten_text = Some(doc.text.clone());
    Ok(p)
}

fn plan_inner(
    doc: &TokenizedDoc,
    labels: &TokenNleLabels,
    cfg: &StrategyConfig,
    strategy: Strategy,
) -> Result<MaskingPlan, PlanError> {
    cfg.validate()?;
    if labels.len() != doc.len() {
        return Err(PlanError::Alignment {
            labels: labels.len(),
            tokens: doc.len(),
        });
    }
    let mut rng = document_rng(cfg.seed, &doc.doc_id);
    let split = cfg.action_split;
    let mut plan = MaskingPlan {
        doc_id: doc.doc_id.clone(),
        strategy,
        selected: Vec::new(),
        actions: Vec::new(),
        random_ids: Vec::new(),
        mlm_labels: Vec::new(),
        nlec_labels: None,
        rewritten_text: None,
        nlec_enabled: strategy.nlec_enabled(),
        nlec_loss_scale: cfg.nlec_loss_scale,
        mask_token_id: cfg.mask_token_id,
    };

    for (i, (tok, &code)) in doc.tokens.iter().zip(labels.as_slice()).enumerate() {
        if cfg.special_token_ids.contains(&tok.id) || !strategy.allows_code(code) {
            continue;
        }
        if rng.gen::<f64>() >= cfg.mask_prob {
            continue;
        }
        let u = rng.gen::<f64>();
        let action = if u < split.mask {
            MaskAction::Mask
        } else if u < split.mask + split.random {
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        if action == MaskAction::Random {
            plan.random_ids.push(draw_non_special(&mut rng, cfg));
        }
        plan.selected.push(i);
        plan.actions.push(action);
        plan.mlm_labels.push(tok.id);
    }

    if plan.nlec_enabled {
        // special tokens sit outside every element
        let nlec = doc
            .tokens
            .iter()
            .zip(labels.as_slice())
            .map(|(t, &c)| if cfg.special_token_ids.contains(&t.id) { 0 } else { c })
            .collect();
        plan.nlec_labels = Some(TokenNleLabels(nlec));
    }
    Ok(plan)
}

fn draw_non_special(rng: &mut ChaCha8Rng, cfg: &StrategyConfig) -> u32 {
    loop {
        let id = rng.gen_range(0..cfg.vocab_size);
        if !cfg.special_token_ids.contains(&id) {
            return id;
        }
    }
}

/// Piecewise correspondence between rewritten and original byte offsets.
///
/// Only replaced regions are stored; bytes between them shift by a constant.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OffsetMap {
    /// `[rewritten_start, rewritten_end, original_start, original_end]` per replacement.
    pub edits: Vec<[usize; 4]>,
}

impl OffsetMap {
    pub fn is_identity(&self) -> bool {
        self.edits.is_empty()
    }

    /// Original offset for a rewritten start offset. Positions inside a
    /// sentinel map to the start of the replaced element.
    pub fn to_original(&self, pos: usize) -> usize {
        let idx = self.edits.partition_point(|e| e[0] <= pos);
        match idx.checked_sub(1).map(|i| self.edits[i]) {
            None => pos,
            Some([rs, re, os, oe]) => {
                if pos < re {
                    if pos == rs {
                        os
                    } else {
                        oe
                    }
                } else {
                    oe + (pos - re)
                }
            }
        }
    }

    /// Original `[start, end)` covered by a rewritten `[start, end)`.
    pub fn to_original_range(&self, start: usize, end: usize) -> (usize, usize) {
        let s = self.to_original(start);
        let idx = self.edits.partition_point(|e| e[0] < end);
        let e = match idx.checked_sub(1).map(|i| self.edits[i]) {
            None => end,
            Some([_, re, _, oe]) if end <= re => oe,
            Some([_, re, _, oe]) => oe + (end - re),
        };
        (s, e.max(s))
    }
}

/// Replaces every span with its type sentinel (`<URL>`, `<MD5>`, ...).
pub fn rewrite_replace_all(text: &str, spans: &[NleSpan]) -> Result<(String, OffsetMap), PlanError> {
    let sorted = checked_sorted_spans(spans, text.len())?;
    let mut out = String::with_capacity(text.len());
    let mut map = OffsetMap::default();
    let mut cursor = 0;
    for s in sorted {
        out.push_str(&text[cursor..s.start]);
        let rs = out.len();
        out.push_str(s.nle_type.sentinel());
        map.edits.push([rs, out.len(), s.start, s.end]);
        cursor = s.end;
    }
    out.push_str(&text[cursor..]);
    Ok((out, map))
}

/// Self-contained per-document training example, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub id: String,
    pub strategy: Strategy,
    /// Token ids after mask / random replacement.
    pub input_ids: Vec<u32>,
    /// Original id at selected positions, [`IGNORE_INDEX`] elsewhere.
    pub mlm_labels: Vec<i64>,
    /// NLE code per token, [`IGNORE_INDEX`] at special-token positions.
    pub nlec_labels: Option<Vec<i64>>,
    pub nlec_loss_scale: f64,
    pub mask_token_id: u32,
    pub selected: Vec<usize>,
    pub actions: Vec<MaskAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewritten_text: Option<String>,
}

pub fn emit_training_record(
    plan: &MaskingPlan,
    doc: &TokenizedDoc,
    special_token_ids: &BTreeSet<u32>,
) -> TrainingRecord {
    let ids = doc.token_ids();
    let mut mlm_labels = vec![IGNORE_INDEX; ids.len()];
    for (&i, &orig) in plan.selected.iter().zip(&plan.mlm_labels) {
        mlm_labels[i] = i64::from(orig);
    }
    let nlec_labels = plan.nlec_labels.as_ref().map(|l| {
        ids.iter()
            .zip(l.as_slice())
            .map(|(id, &c)| {
                if special_token_ids.contains(id) {
                    IGNORE_INDEX
                } else {
                    i64::from(c)
                }
            })
            .collect()
    });
    TrainingRecord {
        id: plan.doc_id.clone(),
        strategy: plan.strategy,
        input_ids: plan.apply(&ids),
        mlm_labels,
        nlec_labels,
        nlec_loss_scale: plan.nlec_loss_scale,
        mask_token_id: plan.mask_token_id,
        selected: plan.selected.clone(),
        actions: plan.actions.clone(),
        rewritten_text: plan.rewritten_text.clone(),
    }
}

/// Reconstructs the plan a record was emitted from, checking internal consistency.
pub fn parse_training_record(rec: &TrainingRecord) -> Result<MaskingPlan, PlanError> {
    let bad = |m: &str| Err(PlanError::Record(format!("{}: {m}", rec.id)));
    let n = rec.input_ids.len();
    if rec.mlm_labels.len() != n || rec.actions.len() != rec.selected.len() {
        return bad("vector lengths disagree");
    }
    if rec.nlec_labels.as_ref().is_some_and(|l| l.len() != n) {
        return bad("nlec label count disagrees with input length");
    }
    if rec.selected.windows(2).any(|w| w[0] >= w[1]) || rec.selected.last().is_some_and(|&i| i >= n) {
        return bad("selected indices must be sorted, unique and in range");
    }
    let mut mlm_labels = Vec::with_capacity(rec.selected.len());
    let mut random_ids = Vec::new();
    let mut next_sel = rec.selected.iter().peekable();
    let mut action_iter = rec.actions.iter();
    for (i, &label) in rec.mlm_labels.iter().enumerate() {
        if next_sel.peek() == Some(&&i) {
            next_sel.next();
            let action = action_iter.next().expect("lengths checked");
            let Ok(orig) = u32::try_from(label) else {
                return bad("selected position without an original id");
            };
            match action {
                MaskAction::Mask if rec.input_ids[i] != rec.mask_token_id => {
                    return bad("mask action without mask token");
                }
                MaskAction::Keep if rec.input_ids[i] != orig => {
                    return bad("keep action changed the token");
                }
                MaskAction::Random => random_ids.push(rec.input_ids[i]),
                _ => {}
            }
            mlm_labels.push(orig);
        } else if label != IGNORE_INDEX {
            return bad("label at an unselected position");
        }
    }
    let nlec_labels = match &rec.nlec_labels {
        None => None,
        Some(l) => {
            let mut codes = Vec::with_capacity(l.len());
            for &v in l {
                match v {
                    IGNORE_INDEX => codes.push(0),
                    0..=7 => codes.push(v as u8),
                    _ => return bad("nlec label out of range"),
                }
            }
            Some(TokenNleLabels(codes))
        }
    };
    Ok(MaskingPlan {
        doc_id: rec.id.clone(),
        strategy: rec.strategy,
        selected: rec.selected.clone(),
        actions: rec.actions.clone(),
        random_ids,
        mlm_labels,
        nlec_enabled: nlec_labels.is_some(),
        nlec_labels,
        rewritten_text: rec.rewritten_text.clone(),
        nlec_loss_scale: rec.nlec_loss_scale,
        mask_token_id: rec.mask_token_id,
    })
}
