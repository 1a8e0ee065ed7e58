//! NLE types, spans and the SLE/FNLE grouping.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The seven regex-identifiable non-linguistic element types.
///
/// Declaration order fixes the integer code used in token labels
/// (`URL = 1` .. `CVE = 7`, `0` meaning "outside any NLE").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NleType {
    #[serde(rename = "URL")]
    Url,
    #[serde(rename = "EMAIL")]
    Email,
    #[serde(rename = "IP")]
    Ip,
    #[serde(rename = "MD5")]
    Md5,
    #[serde(rename = "SHA")]
    Sha,
    #[serde(rename = "BTC")]
    Btc,
    #[serde(rename = "CVE")]
    Cve,
}

/// Semi-linguistic (human-written) versus fully non-linguistic (protocol-generated).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NleGroup {
    #[serde(rename = "SLE")]
    Sle,
    #[serde(rename = "FNLE")]
    Fnle,
}

impl NleType {
    pub const ALL: [NleType; 7] = [
        NleType::Url,
        NleType::Email,
        NleType::Ip,
        NleType::Md5,
        NleType::Sha,
        NleType::Btc,
        NleType::Cve,
    ];

    /// Label code in `1..=7`.
    pub fn code(self) -> u8 {
        match self {
            NleType::Url => 1,
            NleType::Email => 2,
            NleType::Ip => 3,
            NleType::Md5 => 4,
            NleType::Sha => 5,
            NleType::Btc => 6,
            NleType::Cve => 7,
        }
    }

    pub fn from_code(code: u8) -> Option<NleType> {
        match code {
            1..=7 => Some(Self::ALL[code as usize - 1]),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NleType::Url => "URL",
            NleType::Email => "EMAIL",
            NleType::Ip => "IP",
            NleType::Md5 => "MD5",
            NleType::Sha => "SHA",
            NleType::Btc => "BTC",
            NleType::Cve => "CVE",
        }
    }

    /// Placeholder written in place of the element by the replace-all rewrite.
    pub fn sentinel(self) -> &'static str {
        match self {
            NleType::Url => "<URL>",
            NleType::Email => "<EMAIL>",
            NleType::Ip => "<IP>",
            NleType::Md5 => "<MD5>",
            NleType::Sha => "<SHA>",
            NleType::Btc => "<BTC>",
            NleType::Cve => "<CVE>",
        }
    }

    pub fn group(self) -> NleGroup {
        classify_group(self)
    }

    /// Tie-break rank for candidates of equal extent; lower wins.
    pub(crate) fn precedence(self) -> u8 {
        match self {
            NleType::Url => 0,
            NleType::Email => 1,
            NleType::Cve => 2,
            NleType::Sha => 3,
            NleType::Md5 => 4,
            NleType::Btc => 5,
            NleType::Ip => 6,
        }
    }
}

pub fn classify_group(t: NleType) -> NleGroup {
    match t {
        NleType::Url | NleType::Email => NleGroup::Sle,
        NleType::Ip | NleType::Md5 | NleType::Sha | NleType::Btc | NleType::Cve => NleGroup::Fnle,
    }
}

/// True for label codes belonging to fully non-linguistic types (3..=7).
pub fn is_fnle_code(code: u8) -> bool {
    NleType::from_code(code).is_some_and(|t| t.group() == NleGroup::Fnle)
}

impl fmt::Display for NleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown NLE type `{0}`")]
pub struct UnknownNleType(pub String);

impl FromStr for NleType {
    type Err = UnknownNleType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NleType::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownNleType(s.to_string()))
    }
}

/// One detected element occurrence. Offsets are UTF-8 byte offsets, `end` exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NleSpan {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub nle_type: NleType,
    pub defanged: bool,
    /// Raw matched text. Not part of the record format; `None` after deserialization.
    #[serde(skip)]
    pub surface: Option<String>,
    pub canonical: String,
}

impl NleSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn overlaps(&self, other: &NleSpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// The matched source bytes; falls back to slicing `text` when the surface
    /// was not retained (e.g. spans read back from a record file).
    pub fn surface_in<'a>(&'a self, text: &'a str) -> &'a str {
        self.surface.as_deref().unwrap_or(&text[self.start..self.end])
    }
}
