//! Regex-based detection of the seven NLE types, including defanged forms.
//!
//! Every type has its own candidate scanner. Candidates from all scanners are
//! pooled and resolved into a non-overlapping set: the longest candidate wins,
//! and candidates of equal extent are ranked
//! `URL > EMAIL > CVE > SHA > MD5 > BTC > IP`.
//!
//! Pattern summary:
//!
//! | type  | rule                                                                  |
//! |-------|-----------------------------------------------------------------------|
//! | URL   | `http(s)`/`ftp`/`hxxp(s)`/`fxp` scheme, or a `www.` host, plus path   |
//! | EMAIL | `local@domain.tld`, `@` and `.` may be defanged                       |
//! | IP    | dotted quad, octets 0-255, dots may be defanged                       |
//! | MD5   | maximal hex run of exactly 32 chars                                   |
//! | SHA   | maximal hex run of exactly 40, 64 or 128 chars                        |
//! | BTC   | base58 starting `1`/`3`, 25-34 chars; or bech32 starting `bc1`        |
//! | CVE   | `CVE-YYYY-NNNN+`, case-insensitive                                    |

use std::collections::BTreeMap;

use once_cell::sync::Lazy;
use regex::Regex;

use crate::nle::{NleSpan, NleType};

const DOT: &str = r"(?:\.|\[\.\]|\(\.\)|(?i:\[dot\]))";
const AT: &str = r"(?:@|\[@\]|(?i:\[at\]))";
const SCHEME_SEP: &str = r"(?:://|\[://\]|\[:\]//)";
const URL_CHARS: &str = r"[A-Za-z0-9\-._~:/?#\[\]@!$&()*+,;=%]";

static REFANG_RE: Lazy<Regex> = Lazy::new(|| {
    Regex::new(
        r"(?i)(?P<hxxp>hxxp(?P<s>s?)(?:://|\[://\]|\[:\]//))|(?P<fxp>fxp(?:://|\[://\]|\[:\]//))|(?P<sep>\[://\])|(?P<dot>\[\.\]|\(\.\)|\[dot\])|(?P<colon>\[:\])|(?P<at>\[@\]|\[at\])",
    )
    .expect("refang pattern")
});

static DEFAULT_DETECTOR: Lazy<NleDetector> = Lazy::new(NleDetector::new);

/// Rewrites defanged notation back to its canonical form.
///
/// Supported rewrites: `hxxp`/`hxxps` -> `http`/`https` and `fxp` -> `ftp`
/// (in scheme position), `[.]` `(.)` `[dot]` -> `.`, `[:]` -> `:`,
/// `[://]` -> `://`, `[@]` `[at]` -> `@`. Bytes outside those patterns are
/// copied unchanged. Rewriting is repeated until nothing changes, so
/// `refang(refang(x)) == refang(x)` for every input.
pub fn refang(text: &str) -> String {
    let mut current = refang_once(text);
    loop {
        let next = refang_once(&current);
        if next == current {
            return current;
        }
        current = next;
    }
}

fn refang_once(text: &str) -> String {
    REFANG_RE
        .replace_all(text, |caps: &regex::Captures<'_>| {
            if caps.name("hxxp").is_some() {
                let s = if caps.name("s").is_some_and(|m| !m.as_str().is_empty()) {
                    "s"
                } else {
                    ""
                };
                format!("http{s}://")
            } else if caps.name("fxp").is_some() {
                "ftp://".to_string()
            } else if caps.name("sep").is_some() {
                "://".to_string()
            } else if caps.name("dot").is_some() {
                ".".to_string()
            } else if caps.name("colon").is_some() {
                ":".to_string()
            } else {
                "@".to_string()
            }
        })
        .into_owned()
}

/// Detects NLE spans using the shared, lazily compiled detector.
pub fn detect(text: &str) -> Vec<NleSpan> {
    DEFAULT_DETECTOR.detect(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Candidate {
    start: usize,
    end: usize,
    nle_type: NleType,
}

/// Compiled pattern set. Immutable after construction; share it freely.
#[derive(Debug, Clone)]
pub struct NleDetector {
    url: Regex,
    www: Regex,
    email: Regex,
    ip: Regex,
    hex: Regex,
    cve: Regex,
    btc_legacy: Regex,
    btc_bech32: Regex,
}

impl Default for NleDetector {
    fn default() -> Self {
        Self::new()
    }
}

impl NleDetector {
    pub fn new() -> Self {
        let octet = r"(?:25[0-5]|2[0-4][0-9]|1[0-9]{2}|[1-9]?[0-9])";
        let label = r"[A-Za-z0-9](?:[A-Za-z0-9\-]*[A-Za-z0-9])?";
        let local = r"[A-Za-z0-9_%+\-](?:[A-Za-z0-9._%+\-]*[A-Za-z0-9_%+\-])?";
        let compile = |p: String| Regex::new(&p).expect("detector pattern");
        NleDetector {
            url: compile(format!(
                r"(?i:https?|hxxps?|ftp|fxp){SCHEME_SEP}{URL_CHARS}+"
            )),
            www: compile(format!(r"(?i:www){DOT}{URL_CHARS}+")),
            email: compile(format!(r"{local}{AT}(?:{label}{DOT})+[A-Za-z]{{2,24}}")),
            ip: compile(format!(r"{octet}{DOT}{octet}{DOT}{octet}{DOT}{octet}")),
            hex: compile(r"[0-9A-Fa-f]+".to_string()),
            cve: compile(r"(?i:cve)-[0-9]{4}-[0-9]{4,}".to_string()),
            btc_legacy: compile(r"[13][1-9A-HJ-NP-Za-km-z]{24,33}".to_string()),
            btc_bech32: compile(r"(?i:bc1)[02-9ac-hj-np-zAC-HJ-NP-Z]{11,71}".to_string()),
        }
    }

    /// Returns sorted, pairwise non-overlapping spans. Empty input yields no spans.
    pub fn detect(&self, text: &str) -> Vec<NleSpan> {
        let mut candidates = Vec::new();
        self.url_candidates(text, &mut candidates);
        self.email_candidates(text, &mut candidates);
        self.ip_candidates(text, &mut candidates);
        self.hash_candidates(text, &mut candidates);
        self.cve_candidates(text, &mut candidates);
        self.btc_candidates(text, &mut candidates);

        resolve_overlaps(candidates)
            .into_iter()
            .map(|c| {
                let surface = &text[c.start..c.end];
                let canonical = refang(surface);
                NleSpan {
                    start: c.start,
                    end: c.end,
                    nle_type: c.nle_type,
                    defanged: canonical != surface,
                    surface: Some(surface.to_string()),
                    canonical,
                }
            })
            .collect()
    }

    fn url_candidates(&self, text: &str, out: &mut Vec<Candidate>) {
        for re in [&self.url, &self.www] {
            scan(re, text, |start, end| {
                if is_word_byte(prev_byte(text, start)) {
                    return None;
                }
                let trimmed = trim_url_tail(&text[start..end]);
                // at least one host character must survive past the prefix
                (trimmed > prefix_len(&text[start..start + trimmed])).then_some(start + trimmed)
            })
            .for_each(|(s, e)| out.push(cand(s, e, NleType::Url)));
        }
    }

    fn email_candidates(&self, text: &str, out: &mut Vec<Candidate>) {
        scan(&self.email, text, |start, end| {
            let prev = prev_byte(text, start);
            let local_byte = |b: Option<u8>| {
                b.is_some_and(|b| b.is_ascii_alphanumeric() || b"._%+-".contains(&b))
            };
            if local_byte(prev) {
                return None;
            }
            let next = next_byte(text, end);
            if is_word_byte(next) || next == Some(b'-') {
                return None;
            }
            Some(end)
        })
        .for_each(|(s, e)| out.push(cand(s, e, NleType::Email)));
    }

    fn ip_candidates(&self, text: &str, out: &mut Vec<Candidate>) {
        scan(&self.ip, text, |start, end| {
            let prev = prev_byte(text, start);
            if is_word_byte(prev) || prev == Some(b'.') || ends_with_defanged_dot(&text[..start]) {
                return None;
            }
            if is_word_byte(next_byte(text, end)) || followed_by_dot_digit(&text[end..]) {
                return None;
            }
            Some(end)
        })
        .for_each(|(s, e)| out.push(cand(s, e, NleType::Ip)));
    }

    fn hash_candidates(&self, text: &str, out: &mut Vec<Candidate>) {
        for m in self.hex.find_iter(text) {
            let t = match m.len() {
                32 => NleType::Md5,
                40 | 64 | 128 => NleType::Sha,
                _ => continue,
            };
            out.push(cand(m.start(), m.end(), t));
        }
    }

    fn cve_candidates(&self, text: &str, out: &mut Vec<Candidate>) {
        scan(&self.cve, text, |start, end| {
            if is_word_byte(prev_byte(text, start)) || is_word_byte(next_byte(text, end)) {
                None
            } else {
                Some(end)
            }
        })
        .for_each(|(s, e)| out.push(cand(s, e, NleType::Cve)));
    }

    fn btc_candidates(&self, text: &str, out: &mut Vec<Candidate>) {
        for re in [&self.btc_legacy, &self.btc_bech32] {
            scan(re, text, |start, end| {
                if is_word_byte(prev_byte(text, start)) || is_word_byte(next_byte(text, end)) {
                    None
                } else {
                    Some(end)
                }
            })
            .for_each(|(s, e)| out.push(cand(s, e, NleType::Btc)));
        }
    }
}

fn cand(start: usize, end: usize, nle_type: NleType) -> Candidate {
    Candidate {
        start,
        end,
        nle_type,
    }
}

/// Runs `re` over `text`, letting `accept` confirm each match (possibly with a
/// shorter end). A rejected match resumes the search one byte after its start,
/// so a valid match nested inside a rejected one is still found.
fn scan<'a, F>(re: &'a Regex, text: &'a str, mut accept: F) -> impl Iterator<Item = (usize, usize)> + 'a
where
    F: FnMut(usize, usize) -> Option<usize> + 'a,
{
    let mut pos = 0;
    std::iter::from_fn(move || {
        while pos <= text.len() {
            let m = re.find_at(text, pos)?;
            match accept(m.start(), m.end()) {
                Some(end) if end > m.start() => {
                    pos = end;
                    return Some((m.start(), end));
                }
                _ => pos = next_char_boundary(text, m.start()),
            }
        }
        None
    })
}

fn next_char_boundary(text: &str, i: usize) -> usize {
    let mut j = i + 1;
    while j < text.len() && !text.is_char_boundary(j) {
        j += 1;
    }
    j
}

fn prev_byte(text: &str, start: usize) -> Option<u8> {
    start.checked_sub(1).map(|i| text.as_bytes()[i])
}

fn next_byte(text: &str, end: usize) -> Option<u8> {
    text.as_bytes().get(end).copied()
}

fn is_word_byte(b: Option<u8>) -> bool {
    b.is_some_and(|b| b.is_ascii_alphanumeric() || b == b'_')
}

const DEFANGED_DOTS: [&str; 3] = ["[.]", "(.)", "[dot]"];

fn ends_with_defanged_dot(s: &str) -> bool {
    let lower = s.get(s.len().saturating_sub(5)..).unwrap_or(s).to_ascii_lowercase();
    DEFANGED_DOTS.iter().any(|d| lower.ends_with(d))
}

/// True when `rest` starts with a (possibly defanged) dot followed by a digit,
/// i.e. the dotted quad continues.
fn followed_by_dot_digit(rest: &str) -> bool {
    let lower = rest.get(..rest.len().min(6)).unwrap_or(rest).to_ascii_lowercase();
    std::iter::once(".")
        .chain(DEFANGED_DOTS)
        .any(|d| lower.starts_with(d) && lower.as_bytes().get(d.len()).is_some_and(u8::is_ascii_digit))
}

/// Length of the scheme (`hxxps[://]`) or `www.` prefix of a URL candidate.
fn prefix_len(url: &str) -> usize {
    static PREFIX: Lazy<Regex> = Lazy::new(|| {
        Regex::new(&format!(r"^(?:(?i:https?|hxxps?|ftp|fxp){SCHEME_SEP}|(?i:www){DOT})"))
            .expect("prefix pattern")
    });
    PREFIX.find(url).map_or(0, |m| m.end())
}

/// Strips sentence punctuation, unbalanced closing brackets and trailing
/// defanged dots from the end of a URL candidate; returns the kept length.
fn trim_url_tail(url: &str) -> usize {
    let mut s = url;
    loop {
        let lower_tail = s.get(s.len().saturating_sub(5)..).unwrap_or(s).to_ascii_lowercase();
        if let Some(d) = DEFANGED_DOTS.iter().find(|d| lower_tail.ends_with(*d)) {
            s = &s[..s.len() - d.len()];
            continue;
        }
        let Some(&last) = s.as_bytes().last() else {
            return 0;
        };
        let strip = match last {
            b'.' | b',' | b';' | b':' | b'!' | b'?' => true,
            b')' => count(s, b'(') < count(s, b')'),
            b']' => count(s, b'[') < count(s, b']'),
            _ => false,
        };
        if !strip {
            return s.len();
        }
        s = &s[..s.len() - 1];
    }
}

fn count(s: &str, b: u8) -> usize {
    s.bytes().filter(|&c| c == b).count()
}

/// Greedy resolution: longest first, then type precedence, then leftmost.
fn resolve_overlaps(mut candidates: Vec<Candidate>) -> Vec<Candidate> {
    candidates.sort_by_key(|c| {
        (
            std::cmp::Reverse(c.end - c.start),
            c.nle_type.precedence(),
            c.start,
        )
    });
    candidates.dedup();
    let mut accepted: BTreeMap<usize, Candidate> = BTreeMap::new();
    for c in candidates {
        let clashes_before = accepted
            .range(..c.end)
            .next_back()
            .is_some_and(|(_, prev)| prev.end > c.start);
        if !clashes_before {
            accepted.insert(c.start, c);
        }
    }
    accepted.into_values().collect()
}
