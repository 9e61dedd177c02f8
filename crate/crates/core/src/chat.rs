//! CHAT transcript parsing and participant-speech normalization.
//!
//! Parsing is tier-level only: every header (`@...`), main tier (`*SPK:`) and
//! dependent tier (`%xxx:`) becomes one [`ChatLine`]; tab-led continuation
//! lines are folded into the line above.
//!
//! Normalization of a single `*PAR` utterance behaves as if these rules ran in
//! order:
//!
//! 1. Retracing: `<X> [/]` and `X [/]` keep `X` readable, so
//!    `<what are> [/] what are` becomes `what are what are`. When nothing
//!    lexical follows the marker the retraced material is written twice.
//! 2. Fillers: `&uh` -> `uh`, `&um` -> `um`.
//! 3. Fragments: `&` followed by letters -> the letters (`&k` -> `k`). The
//!    newer `&-uh` / `&+fr` spellings are treated the same way.
//! 4. Pauses: `(.)`, `(..)`, `(...)` -> `(short pause)`, `(medium pause)`,
//!    `(long pause)`.
//! 5. `xxx` is kept verbatim.
//! 6. Every other control code is dropped: bracket codes (`[//]`, `[x 3]`,
//!    `[: target]`, `[*]`, ...), events (`&=laughs`), timed pauses, media
//!    bullets, linkers. Words keep their letters: `@` form markers, `:`
//!    lengthening and omitted-sound parentheses are stripped, `+`/`_`
//!    compounds are split, and omitted words (`0is`) and `www` disappear.
//!    Utterance terminators survive as `.`, `?` or `!`.
//! 7. Whitespace is collapsed to single spaces and trimmed.
//!
//! The implementation tokenizes once and resolves the retrace scope from the
//! token structure, which is why rule 1 can see `<...>` groups before rule 6
//! removes them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{Manifest, Split};
use crate::mmse::{ClassLabel, MmseScore};

pub const PARTICIPANT_TAG: &str = "*PAR";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChatError {
    #[error("{source_id}: line {line}: malformed header {text:?}")]
    MalformedHeader { source_id: String, line: usize, text: String },
    #[error("{source_id}: line {line}: malformed tier {text:?}")]
    MalformedTier { source_id: String, line: usize, text: String },
    #[error("{source_id}: line {line}: content line with no governing tier")]
    OrphanContent { source_id: String, line: usize },
    #[error("subject {0} is not in the manifest")]
    NotInManifest(String),
}

/// One tier of a CHAT file. `tag` is written as in the file without the colon:
/// `*PAR`, `*INV`, `%mor`, `@Participants`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatLine {
    pub tag: String,
    pub content: String,
    /// 1-based line number of the tier's first line.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawChatDocument {
    pub source_id: String,
    pub lines: Vec<ChatLine>,
}

pub fn parse_chat(raw_file_text: &str, subject_id: &str) -> Result<RawChatDocument, ChatError> {
    let text = raw_file_text.strip_prefix('\u{feff}').unwrap_or(raw_file_text);
    let mut lines: Vec<ChatLine> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() {
            continue;
        }
        if raw.starts_with('\t') {
            let Some(prev) = lines.last_mut() else {
                return Err(ChatError::OrphanContent { source_id: subject_id.into(), line });
            };
            let extra = raw.trim();
            if !prev.content.is_empty() {
                prev.content.push(' ');
            }
            prev.content.push_str(extra);
            continue;
        }
        let parsed = match raw.chars().next() {
            Some('@') => parse_header(raw),
            Some('*') => parse_tier(raw, |c| c.is_ascii_uppercase() || c.is_ascii_digit()),
            Some('%') => parse_tier(raw, |c| c.is_ascii_alphanumeric()),
            _ => return Err(ChatError::OrphanContent { source_id: subject_id.into(), line }),
        };
        let Some((tag, content)) = parsed else {
            let text = raw.to_string();
            let source_id = subject_id.to_string();
            return Err(if raw.starts_with('@') {
                ChatError::MalformedHeader { source_id, line, text }
            } else {
                ChatError::MalformedTier { source_id, line, text }
            });
        };
        lines.push(ChatLine { tag, content, line });
    }
    Ok(RawChatDocument { source_id: subject_id.to_string(), lines })
}

fn parse_header(raw: &str) -> Option<(String, String)> {
    let body = &raw[1..];
    let (name, content) = match body.split_once(':') {
        Some((name, rest)) => (name, rest.trim()),
        None => (body.trim_end(), ""),
    };
    let valid = name.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, ' ' | '_' | '-'));
    valid.then(|| (format!("@{name}"), content.to_string()))
}

fn parse_tier(raw: &str, code_char: impl Fn(char) -> bool) -> Option<(String, String)> {
    let (head, rest) = raw.split_once(':')?;
    let code = &head[1..];
    if code.is_empty() || !code.chars().all(code_char) {
        return None;
    }
    if !rest.is_empty() && !rest.starts_with(['\t', ' ']) {
        return None;
    }
    Some((head.to_string(), rest.trim().to_string()))
}

/// Raw `*PAR` utterances in document order.
pub fn extract_participant(doc: &RawChatDocument) -> Vec<String> {
    doc.lines.iter().filter(|l| l.tag == PARTICIPANT_TAG).map(|l| l.content.clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PauseKind {
    Short,
    Medium,
    Long,
}

impl PauseKind {
    pub fn phrase(self) -> &'static str {
        match self {
            PauseKind::Short => "(short pause)",
            PauseKind::Medium => "(medium pause)",
            PauseKind::Long => "(long pause)",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Group(Vec<Tok>),
    Code(String),
    Pause(PauseKind),
    Punct(char),
}

const PAUSE_FORMS: [(&str, PauseKind); 6] = [
    ("(...)", PauseKind::Long),
    ("(..)", PauseKind::Medium),
    ("(.)", PauseKind::Short),
    ("(short pause)", PauseKind::Short),
    ("(medium pause)", PauseKind::Medium),
    ("(long pause)", PauseKind::Long),
];

const MEDIA_BULLET: char = '\u{15}';

struct Lexer {
    chars: Vec<char>,
    pos: usize,
}

impl Lexer {
    fn starts_with(&self, s: &str) -> bool {
        s.chars().enumerate().all(|(i, c)| self.chars.get(self.pos + i) == Some(&c))
    }

    /// Lexes until end of input or, inside a group, the closing `>`.
    /// The flag reports whether a closing `>` was consumed.
    fn sequence(&mut self, in_group: bool) -> (Vec<Tok>, bool) {
        let mut out = Vec::new();
        loop {
            while self.chars.get(self.pos).is_some_and(|c| c.is_whitespace()) {
                self.pos += 1;
            }
            let Some(&c) = self.chars.get(self.pos) else {
                return (out, false);
            };
            match c {
                '<' => {
                    self.pos += 1;
                    let (inner, closed) = self.sequence(true);
                    if closed {
                        out.push(Tok::Group(inner));
                    } else {
                        out.extend(inner);
                    }
                }
                '>' => {
                    self.pos += 1;
                    if in_group {
                        return (out, true);
                    }
                }
                '[' => match self.chars[self.pos..].iter().position(|&c| c == ']') {
                    Some(len) => {
                        let code: String = self.chars[self.pos + 1..self.pos + len].iter().collect();
                        out.push(Tok::Code(code.trim().to_string()));
                        self.pos += len + 1;
                    }
                    None => self.pos += 1,
                },
                ']' => self.pos += 1,
                MEDIA_BULLET => {
                    self.pos += 1;
                    match self.chars[self.pos..].iter().position(|&c| c == MEDIA_BULLET) {
                        Some(len) => self.pos += len + 1,
                        None => self.pos = self.chars.len(),
                    }
                }
                '(' => {
                    if let Some((form, kind)) = PAUSE_FORMS.iter().find(|(f, _)| self.starts_with(f)) {
                        out.push(Tok::Pause(*kind));
                        self.pos += form.chars().count();
                    } else if let Some(len) = self.timed_pause_len() {
                        self.pos += len;
                    } else {
                        out.extend(self.word());
                    }
                }
                _ => out.extend(self.word()),
            }
        }
    }

    /// Length of a timed pause such as `(2.5)` or `(1:02.)` at the cursor.
    fn timed_pause_len(&self) -> Option<usize> {
        let rest = &self.chars[self.pos + 1..];
        let close = rest.iter().position(|&c| c == ')')?;
        let body = &rest[..close];
        let ok = !body.is_empty()
            && body.iter().all(|c| c.is_ascii_digit() || *c == '.' || *c == ':')
            && body.contains(&'.')
            && body.iter().any(|c| c.is_ascii_digit());
        ok.then_some(close + 2)
    }

    fn word(&mut self) -> Option<Tok> {
        let start = self.pos;
        while let Some(&c) = self.chars.get(self.pos) {
            if c.is_whitespace() || matches!(c, '<' | '>' | '[' | ']' | MEDIA_BULLET) {
                break;
            }
            self.pos += 1;
        }
        let raw: String = self.chars[start..self.pos].iter().collect();
        classify_word(&raw)
    }
}

fn classify_word(w: &str) -> Option<Tok> {
    if !w.is_empty() && w.chars().all(|c| matches!(c, '.' | '?' | '!')) {
        return w.chars().last().map(Tok::Punct);
    }
    if w == "," {
        return Some(Tok::Punct(','));
    }
    if let Some(rest) = w.strip_prefix('+') {
        // terminators (+..., +/., +//?, +!?) keep their final mark; linkers vanish
        return match rest.chars().last() {
            Some(c @ ('.' | '?' | '!')) => Some(Tok::Punct(c)),
            _ => None,
        };
    }
    if let Some(rest) = w.strip_prefix('&') {
        let rest = match rest.chars().next() {
            Some('=' | '*' | '{' | '}') | None => return None,
            Some('+' | '-') => &rest[1..],
            _ => rest,
        };
        return clean_word(rest);
    }
    clean_word(w)
}

fn clean_word(w: &str) -> Option<Tok> {
    let base = match w.find('@') {
        Some(i) => &w[..i],
        None => w,
    };
    let mapped: String = base
        .chars()
        .filter_map(|c| match c {
            '+' | '_' => Some(' '),
            c if c.is_alphanumeric() || matches!(c, '\'' | '-' | '\u{2019}') => Some(c),
            _ => None,
        })
        .collect();
    let parts: Vec<&str> = mapped
        .split_whitespace()
        .filter(|p| p.chars().any(char::is_alphanumeric))
        .filter(|p| *p != "www" && !is_omitted_word(p))
        .collect();
    if parts.is_empty() {
        None
    } else {
        Some(Tok::Word(parts.join(" ")))
    }
}

fn is_omitted_word(p: &str) -> bool {
    let mut cs = p.chars();
    cs.next() == Some('0') && cs.next().is_some_and(char::is_alphabetic)
}

fn has_lexical(toks: &[Tok]) -> bool {
    toks.iter().any(|t| match t {
        Tok::Word(_) => true,
        Tok::Group(inner) => has_lexical(inner),
        _ => false,
    })
}

fn render(toks: &[Tok], out: &mut Vec<String>) {
    let mut last_unit: Option<Vec<String>> = None;
    for (i, tok) in toks.iter().enumerate() {
        match tok {
            Tok::Word(w) => {
                out.push(w.clone());
                last_unit = Some(vec![w.clone()]);
            }
            Tok::Punct(c) => out.push(c.to_string()),
            Tok::Pause(kind) => out.push(kind.phrase().to_string()),
            Tok::Group(inner) => {
                let mut unit = Vec::new();
                render(inner, &mut unit);
                out.extend(unit.iter().cloned());
                if has_lexical(inner) {
                    last_unit = Some(unit);
                }
            }
            Tok::Code(code) if code == "/" => {
                if !has_lexical(&toks[i + 1..]) {
                    if let Some(unit) = &last_unit {
                        out.extend(unit.iter().cloned());
                    }
                }
            }
            Tok::Code(_) => {}
        }
    }
}

/// Turns one raw `*PAR` utterance into clean text. See the module docs for the
/// rule set.
pub fn normalize_utterance(raw: &str) -> String {
    let mut lexer = Lexer { chars: raw.chars().collect(), pos: 0 };
    let (toks, _) = lexer.sequence(false);
    let mut out = Vec::new();
    render(&toks, &mut out);
    out.iter().flat_map(|s| s.split_whitespace()).collect::<Vec<_>>().join(" ")
}

/// A normalized participant-only transcript with its subject metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub subject_id: String,
    pub split: Split,
    #[serde(default)]
    pub label: Option<ClassLabel>,
    #[serde(default)]
    pub mmse: Option<MmseScore>,
    pub text: String,
}

pub fn build_transcript(doc: &RawChatDocument, manifest: &Manifest) -> Result<Transcript, ChatError> {
    let entry = manifest.get(&doc.source_id).ok_or_else(|| ChatError::NotInManifest(doc.source_id.clone()))?;
    let text = extract_participant(doc)
        .iter()
        .map(|u| normalize_utterance(u))
        .filter(|u| !u.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    Ok(Transcript {
        subject_id: entry.subject_id.clone(),
        split: entry.split,
        label: Some(entry.label),
        mmse: entry.mmse,
        text,
    })
}

#[derive(Debug, Error)]
pub enum TranscriptFileError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} line {line}: {message}")]
    Record { path: String, line: usize, message: String },
}

/// Reads the combined `transcripts.jsonl` written by `normalize`.
pub fn load_transcripts(path: impl AsRef<Path>) -> Result<Vec<Transcript>, TranscriptFileError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text =
        std::fs::read_to_string(path).map_err(|source| TranscriptFileError::Io { path: shown.clone(), source })?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: Transcript = serde_json::from_str(line).map_err(|e| TranscriptFileError::Record {
            path: shown.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(t);
    }
    out.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    Ok(out)
}

pub fn transcripts_to_jsonl(transcripts: &[Transcript]) -> String {
    transcripts.iter().map(|t| serde_json::to_string(t).expect("transcript serializes") + "\n").collect()
}
