//! Prompt assembly in compact chat form.
//!
//! A bundle is one system message carrying the instruction, then one
//! user/assistant pair per exemplar in selection order, then one user message
//! holding only the test transcript: `2 + 4k` messages for `k` per class.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mmse::{round_for_prompt, ClassLabel};
use crate::pool::{Exemplar, PoolKind, Strategy};

/// Canonical instruction template, version 1.
pub const INSTRUCTION_V1: &str = include_str!("../resources/instruction_v1.txt");

pub const FORCED_DECISION_CLAUSE: &str = "Always commit to whichever class is more likely, even when the evidence is mixed. Answers such as MAYBE, UNCERTAIN or UNKNOWN are not allowed, and no field may be left out.";

/// Comment used in demonstrations that have none when comments are enabled.
pub const NEUTRAL_COMMENT: &str = "Assessment based on the transcript.";

pub const FIELD_COMMENT: &str = "comment";
pub const FIELD_PREDICTION: &str = "alzheimers_prediction";
pub const FIELD_PROBABILITY: &str = "probability_score";

const COMMENT_REQUIRED: &str =
    "a brief explanation, one or two sentences, of the transcript evidence behind your decision.";
const COMMENT_OPTIONAL: &str = "optional, a one-line string (may be empty).";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("instruction template does not name the required field {0:?}")]
    MissingField(&'static str),
    #[error("instruction template has no {{forced_decision}} placeholder or the clause is empty")]
    MissingForcedDecision,
    #[error("exemplar {id}: probability {probability} contradicts label {label}")]
    LabelProbabilityMismatch { id: String, label: ClassLabel, probability: f64 },
    #[error("exemplar sequence is unbalanced: {ad} AD vs {hc} HC")]
    Unbalanced { ad: usize, hc: usize },
    #[error("test transcript is empty")]
    EmptyTestText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message { role, content: content.into() }
    }
}

/// Evaluation condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Proxy-probability demonstrations, nested random order.
    MmseProxy,
    /// Same demonstrations with the probability removed.
    NoProxy,
    /// Generated pool with comments, nested random order.
    Reasoning,
    /// Proxy-probability demonstrations ordered by TF-IDF similarity.
    Tfidf,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::MmseProxy, Mode::NoProxy, Mode::Reasoning, Mode::Tfidf];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::MmseProxy => "mmse_proxy",
            Mode::NoProxy => "no_proxy",
            Mode::Reasoning => "reasoning",
            Mode::Tfidf => "tfidf",
        }
    }

    pub fn strategy(self) -> Strategy {
        match self {
            Mode::Tfidf => Strategy::Tfidf,
            _ => Strategy::NestedRandom,
        }
    }

    /// Whether the mode reads the generated pool instead of the proxy pool.
    pub fn uses_reasoning_pool(self) -> bool {
        self == Mode::Reasoning
    }

    pub fn pool_kind(self) -> PoolKind {
        match self {
            Mode::Reasoning => PoolKind::ReasoningAugmented,
            Mode::NoProxy => PoolKind::NoProxy,
            Mode::MmseProxy | Mode::Tfidf => PoolKind::MmseProxy,
        }
    }

    pub fn prompt_config(self) -> PromptConfig {
        PromptConfig {
            include_probability_field: self != Mode::NoProxy,
            include_comment_field: self == Mode::Reasoning,
            ..PromptConfig::default()
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Template with `{comment_spec}` and `{forced_decision}` placeholders.
    pub instruction_text: String,
    pub forced_decision_clause: String,
    /// When false, demonstrations carry no `probability_score`.
    pub include_probability_field: bool,
    /// When true, the comment is required and demonstrations always carry one.
    pub include_comment_field: bool,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            instruction_text: INSTRUCTION_V1.to_string(),
            forced_decision_clause: FORCED_DECISION_CLAUSE.to_string(),
            include_probability_field: true,
            include_comment_field: true,
        }
    }
}

pub fn build_instruction(config: &PromptConfig) -> Result<String, PromptError> {
    let tpl = &config.instruction_text;
    for field in [FIELD_COMMENT, FIELD_PREDICTION, FIELD_PROBABILITY] {
        if !tpl.contains(&format!("\"{field}\"")) {
            return Err(PromptError::MissingField(field));
        }
    }
    if !tpl.contains("{forced_decision}") || config.forced_decision_clause.trim().is_empty() {
        return Err(PromptError::MissingForcedDecision);
    }
    let comment_spec = if config.include_comment_field { COMMENT_REQUIRED } else { COMMENT_OPTIONAL };
    Ok(tpl
        .replace("{comment_spec}", comment_spec)
        .replace("{forced_decision}", config.forced_decision_clause.trim())
        .trim_end()
        .to_string())
}

/// Text of a probability as it appears in demonstrations.
pub fn format_probability(kind: PoolKind, label: ClassLabel, p: f64) -> String {
    match kind {
        PoolKind::ReasoningAugmented => serde_json::to_string(&p).expect("finite probability"),
        PoolKind::MmseProxy | PoolKind::NoProxy => format!("{:.2}", round_for_prompt(label, p)),
    }
}

pub fn render_exemplar(e: &Exemplar, kind: PoolKind, config: &PromptConfig) -> Result<(Message, Message), PromptError> {
    if !kind.probability_side_ok(e.label, e.probability) {
        return Err(PromptError::LabelProbabilityMismatch {
            id: e.id.clone(),
            label: e.label,
            probability: e.probability,
        });
    }
    let mut fields: Vec<String> = Vec::with_capacity(3);
    let comment = match (&e.comment, config.include_comment_field) {
        (Some(c), _) => Some(c.as_str()),
        (None, true) => Some(NEUTRAL_COMMENT),
        (None, false) => None,
    };
    if let Some(c) = comment {
        let quoted = serde_json::to_string(c).expect("string serializes");
        fields.push(format!("\"{FIELD_COMMENT}\": {quoted}"));
    }
    fields.push(format!("\"{FIELD_PREDICTION}\": \"{}\"", e.label.prediction_token()));
    if config.include_probability_field {
        fields.push(format!("\"{FIELD_PROBABILITY}\": {}", format_probability(kind, e.label, e.probability)));
    }
    let answer = format!("{{{}}}", fields.join(", "));
    Ok((Message::new(Role::User, e.transcript_text.clone()), Message::new(Role::Assistant, answer)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub messages: Vec<Message>,
    /// Exemplars per class.
    pub k: usize,
    pub mode: Mode,
}

impl PromptBundle {
    /// Rough token estimate (4 characters per token) for context warnings.
    pub fn estimated_tokens(&self) -> usize {
        self.messages.iter().map(|m| m.content.chars().count()).sum::<usize>() / 4
    }

    pub fn to_chatml(&self) -> String {
        self.messages.iter().map(|m| format!("<|im_start|>{}\n{}<|im_end|>\n", m.role.as_str(), m.content)).collect()
    }
}

/// `[system(instruction), (user, assistant) per exemplar, user(test_text)]`.
pub fn assemble_prompt(
    instruction: &str,
    exemplars: &[&Exemplar],
    test_text: &str,
    mode: Mode,
    kind: PoolKind,
    config: &PromptConfig,
) -> Result<PromptBundle, PromptError> {
    if test_text.trim().is_empty() {
        return Err(PromptError::EmptyTestText);
    }
    let ad = exemplars.iter().filter(|e| e.label == ClassLabel::Ad).count();
    let hc = exemplars.len() - ad;
    if ad != hc {
        return Err(PromptError::Unbalanced { ad, hc });
    }
    let mut messages = Vec::with_capacity(2 + 2 * exemplars.len());
    messages.push(Message::new(Role::System, instruction));
    for e in exemplars {
        let (user, assistant) = render_exemplar(e, kind, config)?;
        messages.push(user);
        messages.push(assistant);
    }
    messages.push(Message::new(Role::User, test_text));
    Ok(PromptBundle { messages, k: ad, mode })
}

/// Instruction and rendering settings for one mode, built once per run.
#[derive(Debug, Clone)]
pub struct PromptBuilder {
    pub mode: Mode,
    pub kind: PoolKind,
    pub config: PromptConfig,
    instruction: String,
}

impl PromptBuilder {
    pub fn new(mode: Mode, kind: PoolKind, config: PromptConfig) -> Result<Self, PromptError> {
        let instruction = build_instruction(&config)?;
        Ok(PromptBuilder { mode, kind, config, instruction })
    }

    pub fn for_mode(mode: Mode) -> Self {
        PromptBuilder::new(mode, mode.pool_kind(), mode.prompt_config()).expect("built-in template is valid")
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn assemble(&self, exemplars: &[&Exemplar], test_text: &str) -> Result<PromptBundle, PromptError> {
        assemble_prompt(&self.instruction, exemplars, test_text, self.mode, self.kind, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmse::{proxy_probability, MmseScore};

    fn proxy_ex(id: &str, label: ClassLabel, mmse: i64) -> Exemplar {
        let m = MmseScore::new(mmse).unwrap();
        Exemplar {
            id: id.into(),
            transcript_text: format!("transcript of {id}"),
            label,
            mmse: Some(m),
            probability: proxy_probability(label, m),
            comment: None,
        }
    }

    #[test]
    fn default_instruction_names_fields_and_clause() {
        let text = build_instruction(&PromptConfig::default()).unwrap();
        for f in [FIELD_COMMENT, FIELD_PREDICTION, FIELD_PROBABILITY] {
            assert!(text.contains(f));
        }
        assert!(text.contains(FORCED_DECISION_CLAUSE));
        assert!(text.contains("MAYBE"));
        assert!(!text.contains("{comment_spec}") && !text.contains("{forced_decision}"));
    }

    #[test]
    fn no_proxy_instruction_still_asks_for_probability() {
        let text = build_instruction(&Mode::NoProxy.prompt_config()).unwrap();
        assert!(text.contains(FIELD_PROBABILITY));
        assert!(text.contains(COMMENT_OPTIONAL));
    }

    #[test]
    fn template_validation() {
        let mut cfg = PromptConfig::default();
        cfg.instruction_text = cfg.instruction_text.replace("\"probability_score\"", "\"score\"");
        assert_eq!(build_instruction(&cfg), Err(PromptError::MissingField(FIELD_PROBABILITY)));
        let cfg = PromptConfig { forced_decision_clause: "  ".into(), ..PromptConfig::default() };
        assert_eq!(build_instruction(&cfg), Err(PromptError::MissingForcedDecision));
    }

    #[test]
    fn proxy_exemplars_render_two_decimals() {
        let cfg = Mode::MmseProxy.prompt_config();
        let (user, asst) = render_exemplar(&proxy_ex("A", ClassLabel::Ad, 26), PoolKind::MmseProxy, &cfg).unwrap();
        assert_eq!(user.content, "transcript of A");
        assert_eq!(asst.content, r#"{"alzheimers_prediction": "YES", "probability_score": 0.60}"#);
        let (_, asst) = render_exemplar(&proxy_ex("H", ClassLabel::Hc, 30), PoolKind::MmseProxy, &cfg).unwrap();
        assert!(asst.content.contains("\"NO\"") && asst.content.contains("0.00"));
    }

    #[test]
    fn no_proxy_omits_probability() {
        let (_, asst) =
            render_exemplar(&proxy_ex("A", ClassLabel::Ad, 20), PoolKind::NoProxy, &Mode::NoProxy.prompt_config())
                .unwrap();
        assert!(!asst.content.contains(FIELD_PROBABILITY));
    }

    #[test]
    fn reasoning_exemplar_keeps_comment_and_raw_probability() {
        let e = Exemplar {
            comment: Some("Names few picture elements; many \"uh\" fillers.".into()),
            probability: 0.83,
            ..proxy_ex("A", ClassLabel::Ad, 14)
        };
        let (_, asst) = render_exemplar(&e, PoolKind::ReasoningAugmented, &Mode::Reasoning.prompt_config()).unwrap();
        assert!(asst.content.contains(r#""comment": "Names few picture elements; many \"uh\" fillers.""#));
        assert!(asst.content.ends_with("\"probability_score\": 0.83}"));
        let plain = proxy_ex("B", ClassLabel::Hc, 29);
        let (_, asst) = render_exemplar(&plain, PoolKind::MmseProxy, &PromptConfig::default()).unwrap();
        assert!(asst.content.contains(NEUTRAL_COMMENT));
    }

    #[test]
    fn inconsistent_probability_is_rejected() {
        let e = Exemplar { probability: 0.7, ..proxy_ex("H", ClassLabel::Hc, 29) };
        assert!(matches!(
            render_exemplar(&e, PoolKind::MmseProxy, &PromptConfig::default()),
            Err(PromptError::LabelProbabilityMismatch { .. })
        ));
    }

    #[test]
    fn bundle_shapes() {
        let b = PromptBuilder::for_mode(Mode::MmseProxy);
        let zero = b.assemble(&[], "the boy falls").unwrap();
        assert_eq!(zero.messages.len(), 2);
        assert_eq!(zero.messages[1], Message::new(Role::User, "the boy falls"));
        let ex: Vec<Exemplar> = (0..14)
            .flat_map(|i| {
                [proxy_ex(&format!("A{i}"), ClassLabel::Ad, 20), proxy_ex(&format!("H{i}"), ClassLabel::Hc, 29)]
            })
            .collect();
        let refs: Vec<&Exemplar> = ex.iter().collect();
        let full = b.assemble(&refs, "test").unwrap();
        assert_eq!(full.messages.len(), 58);
        assert_eq!(full.k, 14);
        assert_eq!(full.messages[1].content, "transcript of A0");
        assert_eq!(full.messages[3].content, "transcript of H0");
        assert_eq!(b.assemble(&refs, " "), Err(PromptError::EmptyTestText));
        assert_eq!(b.assemble(&refs[..3], "t"), Err(PromptError::Unbalanced { ad: 2, hc: 1 }));
    }

    #[test]
    fn chatml_rendering() {
        let b = PromptBuilder::for_mode(Mode::MmseProxy).assemble(&[], "hello").unwrap();
        let s = b.to_chatml();
        assert!(s.starts_with("<|im_start|>system\n"));
        assert!(s.ends_with("<|im_start|>user\nhello<|im_end|>\n"));
    }
}
