#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;

use nlekit::nle::is_fnle_code;
use nlekit::probing::{build_target_list, normalize_vocab_surface, ProbeTargetList};
use nlekit::{NleSpan, NleType, Token, TokenNleLabels, TokenizedDoc};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub const BOS: u32 = 0;
pub const EOS: u32 = 2;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn read_jsonl(name: &str) -> Vec<Value> {
    let f = fs::File::open(fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    BufReader::new(f)
        .lines()
        .map(|l| l.unwrap())
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(&l).unwrap())
        .collect()
}

pub fn manifest() -> Value {
    serde_json::from_str(&fs::read_to_string(fixture("manifest.json")).unwrap()).unwrap()
}

/// `(id, text)` pairs of a document fixture.
pub fn docs(name: &str) -> Vec<(String, String)> {
    read_jsonl(name)
        .into_iter()
        .map(|v| (v["id"].as_str().unwrap().to_string(), v["text"].as_str().unwrap().to_string()))
        .collect()
}

/// Comparable view of a span, ignoring the retained surface.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpanKey {
    pub start: usize,
    pub end: usize,
    pub nle_type: String,
    pub defanged: bool,
    pub canonical: String,
}

pub fn key(s: &NleSpan) -> SpanKey {
    SpanKey {
        start: s.start,
        end: s.end,
        nle_type: s.nle_type.name().to_string(),
        defanged: s.defanged,
        canonical: s.canonical.clone(),
    }
}

pub fn key_from_json(v: &Value) -> SpanKey {
    SpanKey {
        start: v["start"].as_u64().unwrap() as usize,
        end: v["end"].as_u64().unwrap() as usize,
        nle_type: v["type"].as_str().unwrap().to_string(),
        defanged: v["defanged"].as_bool().unwrap(),
        canonical: v["canonical"].as_str().unwrap().to_string(),
    }
}

/// Gold spans of the report fixture keyed by document id.
pub fn gold_spans() -> BTreeMap<String, Vec<SpanKey>> {
    read_jsonl("reports.gold.jsonl")
        .into_iter()
        .map(|v| {
            let spans = v["spans"].as_array().unwrap().iter().map(key_from_json).collect();
            (v["id"].as_str().unwrap().to_string(), spans)
        })
        .collect()
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Byte-level-BPE-like test tokenizer: each token is an optional whitespace
/// prefix plus either an alphanumeric run (at most 6 chars) or one other char.
/// Ids are hashed into `[4, 50_000)`; BOS and EOS are empty tokens at the ends.
pub fn toy_tokenize(id: &str, text: &str) -> TokenizedDoc {
    let mut tokens = vec![Token::new(BOS, 0, 0)];
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        while i < chars.len() && chars[i].1.is_whitespace() {
            i += 1;
        }
        if i < chars.len() {
            if chars[i].1.is_alphanumeric() {
                let run_start = i;
                while i < chars.len() && chars[i].1.is_alphanumeric() && i - run_start < 6 {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let end = chars.get(i).map_or(text.len(), |c| c.0);
        let piece = &text[start..end];
        tokens.push(Token::new(4 + (fnv(piece) % 49_996) as u32, start, end));
    }
    tokens.push(Token::new(EOS, text.len(), text.len()));
    TokenizedDoc::new(id, text, tokens)
}

/// Per-byte oracle: for each token, count covered bytes per type by direct
/// lookup; the largest count wins, ties to the type met first from the left.
pub fn oracle_align(doc: &TokenizedDoc, spans: &[NleSpan]) -> Vec<u8> {
    let mut byte_code = vec![0u8; doc.text.len()];
    for s in spans {
        for b in &mut byte_code[s.start..s.end] {
            *b = s.nle_type.code();
        }
    }
    doc.tokens
        .iter()
        .map(|t| {
            let mut counts = [0usize; 8];
            let mut first_seen = Vec::new();
            for &c in &byte_code[t.start..t.end] {
                if c != 0 {
                    if counts[c as usize] == 0 {
                        first_seen.push(c);
                    }
                    counts[c as usize] += 1;
                }
            }
            let mut best = 0u8;
            for &c in &first_seen {
                if best == 0 || counts[c as usize] > counts[best as usize] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

const WORDS: [&str; 12] = ["alpha", "beta", "Größe", "x", "日本語", "café", "the", "-", "(", "…", "naïve", "42"];

/// Random alignment case: text of mixed-width chars, random disjoint spans,
/// and a random tokenization with gaps, empty tokens and straddling cuts.
pub fn random_alignment_case(rng: &mut ChaCha8Rng) -> (TokenizedDoc, Vec<NleSpan>) {
    let n_words = rng.gen_range(0..40);
    let mut text = String::new();
    for i in 0..n_words {
        if i > 0 {
            text.push(if rng.gen_bool(0.8) { ' ' } else { '\n' });
        }
        text.push_str(WORDS[rng.gen_range(0..WORDS.len())]);
    }
    let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();

    let mut cuts: Vec<usize> = bounds.iter().copied().filter(|_| rng.gen_bool(0.3)).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut spans = Vec::new();
    for pair in cuts.chunks(2) {
        if let [s, e] = *pair {
            if s < e && rng.gen_bool(0.7) {
                let t = NleType::ALL[rng.gen_range(0..7)];
                spans.push(NleSpan {
                    start: s,
                    end: e,
                    nle_type: t,
                    defanged: false,
                    surface: None,
                    canonical: text[s..e].to_string(),
                });
            }
        }
    }

    let mut tokens = Vec::new();
    if rng.gen_bool(0.5) {
        tokens.push(Token::new(BOS, 0, 0));
    }
    let mut pos = 0;
    while pos < bounds.len() - 1 {
        let step = rng.gen_range(1..=4).min(bounds.len() - 1 - pos);
        let (s, e) = (bounds[pos], bounds[pos + step]);
        pos += step;
        if rng.gen_bool(0.1) {
            continue;
        }
        tokens.push(Token::new(rng.gen_range(4..1000), s, e));
        if rng.gen_bool(0.05) {
            tokens.push(Token::new(3, e, e));
        }
    }
    if rng.gen_bool(0.5) {
        tokens.push(Token::new(EOS, text.len(), text.len()));
    }
    (TokenizedDoc::new("case", text, tokens), spans)
}

pub fn labels_of(l: &TokenNleLabels) -> Vec<u8> {
    l.as_slice().to_vec()
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_nlekit")
}

/// Writes `docs` as a token-bearing record file using [`toy_tokenize`].
pub fn write_tokenized(path: &std::path::Path, docs: &[(String, String)]) {
    let mut out = String::new();
    for (id, text) in docs {
        let d = toy_tokenize(id, text);
        let v = serde_json::json!({ "id": id, "text": text, "tokens": d.tokens });
        out.push_str(&v.to_string());
        out.push('\n');
    }
    fs::write(path, out).unwrap();
}

pub fn fixture_targets() -> ProbeTargetList {
    let phrases: Vec<String> = fs::read_to_string(fixture("phrases.txt"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(String::from)
        .collect();
    let raw: HashMap<String, u32> = serde_json::from_str(&fs::read_to_string(fixture("vocab.json")).unwrap()).unwrap();
    let vocab = raw.into_iter().map(|(k, v)| (normalize_vocab_surface(&k), v)).collect();
    build_target_list(&phrases, &vocab, 25_000).unwrap()
}

pub fn probe_docs() -> Vec<TokenizedDoc> {
    read_jsonl("probe_corpus.jsonl")
        .into_iter()
        .map(|v| {
            let tokens: Vec<Token> = serde_json::from_value(v["tokens"].clone()).unwrap();
            TokenizedDoc::new(v["id"].as_str().unwrap(), v["text"].as_str().unwrap(), tokens)
        })
        .collect()
}

/// All-pairs distance check, quadratic on purpose.
pub fn oracle_near(labels: &[u8], window: usize) -> Vec<bool> {
    (0..labels.len())
        .map(|i| (0..labels.len()).any(|j| is_fnle_code(labels[j]) && i.abs_diff(j) <= window))
        .collect()
}
