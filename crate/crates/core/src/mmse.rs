//! MMSE-anchored proxy probabilities.
//!
//! Each class gets its own sigmoid over impairment `30 - m`:
//!
//! ```text
//! P(AD | AD, m) = sigmoid((30 - m) / t_ad)
//! P(AD | HC, m) = sigmoid((30 - m) / t_hc) - 0.5
//! ```
//!
//! Both temperatures are pinned by requiring 0.60 (AD) and 0.40 (HC) at
//! m = 26, which gives `t_ad = 4 / ln(1.5)` and `t_hc = 4 / ln(9)`. Nothing is
//! fitted. AD scores land in `[0.5, 1)`, HC scores in `[0, 0.5)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest score on the Mini-Mental State Examination.
pub const MMSE_MAX: u8 = 30;

/// MMSE score used to pin both temperatures.
pub const ANCHOR_SCORE: u8 = 26;
pub const ANCHOR_AD: f64 = 0.60;
pub const ANCHOR_HC: f64 = 0.40;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MmseError {
    #[error("MMSE score {0} is outside 0..=30")]
    OutOfRange(i64),
}

/// Diagnostic class of a subject. `Ad` encodes y = 1, `Hc` encodes y = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "AD")]
    Ad,
    #[serde(rename = "HC")]
    Hc,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 2] = [ClassLabel::Ad, ClassLabel::Hc];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Ad => "AD",
            ClassLabel::Hc => "HC",
        }
    }

    /// The forced-decision token a correct answer carries for this class.
    pub fn prediction_token(self) -> &'static str {
        match self {
            ClassLabel::Ad => "YES",
            ClassLabel::Hc => "NO",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "AD" => Ok(ClassLabel::Ad),
            "HC" => Ok(ClassLabel::Hc),
            other => Err(format!("unknown class label {other:?} (expected AD or HC)")),
        }
    }
}

/// An MMSE score, guaranteed to lie in `0..=30`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct MmseScore(u8);

impl MmseScore {
    pub fn new(value: i64) -> Result<Self, MmseError> {
        if (0..=MMSE_MAX as i64).contains(&value) {
            Ok(MmseScore(value as u8))
        } else {
            Err(MmseError::OutOfRange(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// All 31 valid scores in ascending order.
    pub fn all() -> impl Iterator<Item = MmseScore> {
        (0..=MMSE_MAX).map(MmseScore)
    }
}

impl TryFrom<i64> for MmseScore {
    type Error = MmseError;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        MmseScore::new(value)
    }
}

impl From<MmseScore> for u8 {
    fn from(s: MmseScore) -> u8 {
        s.0
    }
}

impl fmt::Display for MmseScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Conventional MMSE severity bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MmseBand {
    NoImpairment,
    Questionable,
    Mild,
    Moderate,
    Severe,
}

impl MmseBand {
    pub const ALL: [MmseBand; 5] =
        [MmseBand::NoImpairment, MmseBand::Questionable, MmseBand::Mild, MmseBand::Moderate, MmseBand::Severe];

    pub fn name(self) -> &'static str {
        match self {
            MmseBand::NoImpairment => "No impairment",
            MmseBand::Questionable => "Questionable",
            MmseBand::Mild => "Mild",
            MmseBand::Moderate => "Moderate",
            MmseBand::Severe => "Severe",
        }
    }

    /// Inclusive score range covered by the band.
    pub fn range(self) -> (u8, u8) {
        match self {
            MmseBand::NoImpairment => (30, 30),
            MmseBand::Questionable => (26, 29),
            MmseBand::Mild => (21, 25),
            MmseBand::Moderate => (11, 20),
            MmseBand::Severe => (0, 10),
        }
    }
}

impl fmt::Display for MmseBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn mmse_band(m: MmseScore) -> MmseBand {
    match m.value() {
        30 => MmseBand::NoImpairment,
        26..=29 => MmseBand::Questionable,
        21..=25 => MmseBand::Mild,
        11..=20 => MmseBand::Moderate,
        _ => MmseBand::Severe,
    }
}

/// Band lookup on an unchecked integer.
pub fn mmse_band_raw(m: i64) -> Result<MmseBand, MmseError> {
    MmseScore::new(m).map(mmse_band)
}

/// The two class temperatures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmseProxyParams {
    pub t_ad: f64,
    pub t_hc: f64,
}

impl Default for MmseProxyParams {
    fn default() -> Self {
        derive_temperatures()
    }
}

/// Solves the two anchor conditions in closed form.
///
/// With `d = 30 - 26 = 4`: `sigmoid(d / t_ad) = 0.6` gives `t_ad = d / ln(0.6 / 0.4)`,
/// and `sigmoid(d / t_hc) - 0.5 = 0.4` gives `t_hc = d / ln(0.9 / 0.1)`.
pub fn derive_temperatures() -> MmseProxyParams {
    let d = f64::from(MMSE_MAX - ANCHOR_SCORE);
    let hc_target = ANCHOR_HC + 0.5;
    MmseProxyParams { t_ad: d / (ANCHOR_AD / (1.0 - ANCHOR_AD)).ln(), t_hc: d / (hc_target / (1.0 - hc_target)).ln() }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// AD proxy probability for a labelled subject.
pub fn proxy_probability(label: ClassLabel, m: MmseScore) -> f64 {
    proxy_probability_with(&derive_temperatures(), label, m)
}

pub fn proxy_probability_with(params: &MmseProxyParams, label: ClassLabel, m: MmseScore) -> f64 {
    let impairment = f64::from(MMSE_MAX - m.value());
    match label {
        ClassLabel::Ad => sigmoid(impairment / params.t_ad),
        ClassLabel::Hc => sigmoid(impairment / params.t_hc) - 0.5,
    }
}

/// Proxy probability on an unchecked integer score.
pub fn proxy_probability_raw(label: ClassLabel, m: i64) -> Result<f64, MmseError> {
    MmseScore::new(m).map(|m| proxy_probability(label, m))
}

/// Rounds a probability to the two decimals used in prompts and pool files.
///
/// HC values close to 0.5 (MMSE <= 20) would round up to 0.50 and cross the
/// decision threshold, so the HC side is capped at 0.49.
pub fn round_for_prompt(label: ClassLabel, p: f64) -> f64 {
    let r = (p * 100.0).round() / 100.0;
    match label {
        ClassLabel::Hc if r >= 0.5 => 0.49,
        ClassLabel::Ad if r < 0.5 => 0.5,
        _ => r,
    }
}

/// One row of the audit table printed by `proxy-table`.
#[derive(Debug, Clone, Serialize)]
pub struct ProxyTableRow {
    pub label: ClassLabel,
    pub mmse: u8,
    pub probability: f64,
    pub rendered: f64,
    pub band: MmseBand,
}

/// All 62 (label, score) pairs, AD first, scores ascending.
pub fn proxy_table() -> Vec<ProxyTableRow> {
    let params = derive_temperatures();
    ClassLabel::ALL
        .iter()
        .flat_map(|&label| {
            MmseScore::all().map(move |m| {
                let p = proxy_probability_with(&params, label, m);
                ProxyTableRow {
                    label,
                    mmse: m.value(),
                    probability: p,
                    rendered: round_for_prompt(label, p),
                    band: mmse_band(m),
                }
            })
        })
        .collect()
}
