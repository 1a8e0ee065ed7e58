//! Detection of non-linguistic elements (URLs, emails, IPs, hashes, Bitcoin
//! addresses, CVE IDs) in cybersecurity text, their alignment onto subword
//! tokenizations, and NLE-aware masked-language-model training plans.

pub mod align;
pub mod detector;
pub mod masking;
pub mod nle;
pub mod probing;
pub mod records;
pub mod stats;
pub mod cli;

pub use align::{align, AlignError, Token, TokenNleLabels, TokenizedDoc};
pub use detector::{detect, refang, NleDetector};
pub use nle::{classify_group, NleGroup, NleSpan, NleType};
