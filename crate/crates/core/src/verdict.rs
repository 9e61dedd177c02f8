//! Strict forced-decision output parsing.
//!
//! Output contract: the first balanced `{...}` in the model text must be a
//! JSON object with
//!
//! * `alzheimers_prediction`: exactly `"YES"` or `"NO"` (case-sensitive);
//! * `probability_score`: a number in `[0, 1]`;
//! * `comment`: a string, possibly empty.
//!
//! Anything else is a [`ParseFailure`]. Failures are never turned into a
//! class decision.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::mmse::ClassLabel;
use crate::prompt::{FIELD_COMMENT, FIELD_PREDICTION, FIELD_PROBABILITY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prediction {
    #[serde(rename = "YES")]
    Yes,
    #[serde(rename = "NO")]
    No,
}

impl Prediction {
    pub fn label(self) -> ClassLabel {
        match self {
            Prediction::Yes => ClassLabel::Ad,
            Prediction::No => ClassLabel::Hc,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Prediction::Yes => "YES",
            Prediction::No => "NO",
        }
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub comment: String,
    pub prediction: Prediction,
    /// Absent only when the probability was not required.
    pub probability: Option<f64>,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "field", rename_all = "snake_case")]
pub enum FailureReason {
    NoJsonObject,
    InvalidJson,
    MissingField(String),
    OutOfRangeProbability,
    InvalidPrediction,
    EmptyOutput,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::NoJsonObject => f.write_str("no JSON object"),
            FailureReason::InvalidJson => f.write_str("invalid JSON"),
            FailureReason::MissingField(name) => write!(f, "missing field {name}"),
            FailureReason::OutOfRangeProbability => f.write_str("probability missing from [0, 1]"),
            FailureReason::InvalidPrediction => f.write_str("prediction is not YES or NO"),
            FailureReason::EmptyOutput => f.write_str("empty output"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub reason: FailureReason,
    pub raw_text: String,
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unparsable output ({})", self.reason)
    }
}

impl std::error::Error for ParseFailure {}

/// Which fields must be present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requirements {
    pub probability: bool,
    pub comment: bool,
}

impl Default for Requirements {
    fn default() -> Self {
        Requirements { probability: true, comment: false }
    }
}

/// Parses with the probability optionally required and the comment optional.
pub fn parse_verdict(text: &str, require_probability: bool) -> Result<Verdict, ParseFailure> {
    parse_verdict_with(text, Requirements { probability: require_probability, comment: false })
}

pub fn parse_verdict_with(text: &str, req: Requirements) -> Result<Verdict, ParseFailure> {
    let fail = |reason| ParseFailure { reason, raw_text: text.to_string() };
    if text.trim().is_empty() {
        return Err(fail(FailureReason::EmptyOutput));
    }
    let Some(start) = text.find('{') else {
        return Err(fail(FailureReason::NoJsonObject));
    };
    let Some(end) = balanced_object_end(&text[start..]) else {
        return Err(fail(FailureReason::InvalidJson));
    };
    let obj: Map<String, Value> = match serde_json::from_str(&text[start..start + end]) {
        Ok(Value::Object(m)) => m,
        _ => return Err(fail(FailureReason::InvalidJson)),
    };

    let prediction = match obj.get(FIELD_PREDICTION) {
        None => return Err(fail(FailureReason::MissingField(FIELD_PREDICTION.into()))),
        Some(Value::String(s)) if s == "YES" => Prediction::Yes,
        Some(Value::String(s)) if s == "NO" => Prediction::No,
        Some(_) => return Err(fail(FailureReason::InvalidPrediction)),
    };

    let probability = match obj.get(FIELD_PROBABILITY) {
        None | Some(Value::Null) if !req.probability => None,
        None | Some(Value::Null) => return Err(fail(FailureReason::MissingField(FIELD_PROBABILITY.into()))),
        Some(v) => match v.as_f64() {
            Some(p) if (0.0..=1.0).contains(&p) => Some(p),
            _ => return Err(fail(FailureReason::OutOfRangeProbability)),
        },
    };

    let comment = match obj.get(FIELD_COMMENT) {
        Some(Value::String(s)) => s.clone(),
        _ if req.comment => return Err(fail(FailureReason::MissingField(FIELD_COMMENT.into()))),
        _ => String::new(),
    };

    Ok(Verdict { comment, prediction, probability, raw_text: text.to_string() })
}

/// Byte length of the balanced object starting at `s[0] == '{'`, honouring
/// string literals and escapes.
fn balanced_object_end(s: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, b) in s.bytes().enumerate() {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}
