mod common;

use adprompt::chat::{extract_participant, normalize_utterance, parse_chat};
use proptest::prelude::*;
use regex::Regex;

/// Words, `xxx`, the three pause phrases and terminal punctuation, single-spaced.
fn clean_grammar() -> Regex {
    let token = r"(?:[\p{L}\p{N}'’-]+|\((?:short|medium|long) pause\)|[.?!,])";
    Regex::new(&format!(r"^(?:{token}(?: {token})*)?$")).unwrap()
}

fn raw_participant_tiers() -> Vec<(String, Vec<String>)> {
    common::chat_files()
        .into_iter()
        .map(|(id, text)| {
            let doc = parse_chat(&text, &id).unwrap();
            (id, extract_participant(&doc))
        })
        .collect()
}

#[test]
fn corpus_output_is_clean() {
    let re = clean_grammar();
    for (id, utts) in raw_participant_tiers() {
        for u in utts {
            let out = normalize_utterance(&u);
            assert!(re.is_match(&out), "{id}: {out:?} from {u:?}");
            for code in ["[/]", "[//]", "<", ">", "&", "(.)", "(..)", "(...)", "\u{15}"] {
                assert!(!out.contains(code), "{id}: {code} leaked into {out:?}");
            }
        }
    }
    for t in common::transcripts() {
        assert!(re.is_match(&t.text), "{}: {:?}", t.subject_id, t.text);
    }
}

#[test]
fn corpus_normalization_is_idempotent() {
    for (id, utts) in raw_participant_tiers() {
        for u in utts {
            let once = normalize_utterance(&u);
            assert_eq!(normalize_utterance(&once), once, "{id}: {u:?}");
        }
    }
}

fn count_tokens(text: &str, tok: &str) -> usize {
    text.split_whitespace().filter(|w| *w == tok).count()
}

#[test]
fn cues_survive_one_for_one() {
    for (id, utts) in raw_participant_tiers() {
        let raw = utts.join(" ");
        let out: Vec<String> = utts.iter().map(|u| normalize_utterance(u)).collect();
        let out = out.join(" ");
        assert_eq!(count_tokens(&raw, "xxx"), count_tokens(&out, "xxx"), "{id} xxx");
        assert_eq!(count_tokens(&raw, "&uh"), count_tokens(&out, "uh"), "{id} uh");
        assert_eq!(count_tokens(&raw, "&um"), count_tokens(&out, "um"), "{id} um");
        for (mark, phrase) in [("(.)", "(short pause)"), ("(..)", "(medium pause)"), ("(...)", "(long pause)")] {
            assert_eq!(count_tokens(&raw, mark), out.matches(phrase).count(), "{id} {mark}");
        }
    }
}

#[test]
fn investigator_and_dependent_tiers_never_leak() {
    for (id, text) in common::chat_files() {
        let doc = parse_chat(&text, &id).unwrap();
        let participant = extract_participant(&doc).join(" ");
        for line in doc.lines.iter().filter(|l| l.tag != "*PAR") {
            if line.tag.starts_with('@') {
                continue;
            }
            assert!(!participant.contains(&line.content), "{id}: {} content leaked", line.tag);
        }
        assert!(!participant.contains("tell me everything"));
        assert!(!participant.contains("pro|"));
    }
}

#[test]
fn continuation_lines_fold_into_the_participant_tier() {
    let (_, text) = common::chat_files().into_iter().find(|(id, _)| id == "S003").unwrap();
    let doc = parse_chat(&text, "S003").unwrap();
    let utts = extract_participant(&doc);
    assert_eq!(utts.len(), 4);
    assert!(utts[1].starts_with("she's &um doing [//] she's washing"));
    assert_eq!(normalize_utterance(&utts[1]), "she's um doing she's washing the the dishes .");
}

#[test]
fn pinned_fixture_transcript() {
    let t = common::transcripts().into_iter().find(|t| t.subject_id == "T001").unwrap();
    assert_eq!(
        t.text,
        "uh the (medium pause) the boy is in is in the cookies . and um xxx (long pause) the water . \
         the lady is uh (short pause) the lady is washing ."
    );
}

fn chat_token() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z]{1,8}".prop_map(String::from),
        Just("&uh".to_string()),
        Just("&um".to_string()),
        "&[a-z]{1,3}".prop_map(String::from),
        Just("&=laughs".to_string()),
        Just("xxx".to_string()),
        Just("(.)".to_string()),
        Just("(..)".to_string()),
        Just("(...)".to_string()),
        Just("[/]".to_string()),
        Just("[//]".to_string()),
        Just("[x 2]".to_string()),
        Just("[: word]".to_string()),
        Just("[*]".to_string()),
        Just("+...".to_string()),
        Just("0is".to_string()),
        Just("www".to_string()),
        "[a-z]{2,5}@o".prop_map(String::from),
        "<[a-z]{1,5} [a-z]{1,5}>".prop_map(String::from),
        Just(".".to_string()),
        Just("?".to_string()),
    ]
}

proptest! {
    #[test]
    fn normalization_properties(tokens in prop::collection::vec(chat_token(), 0..24)) {
        let raw = tokens.join(" ");
        let out = normalize_utterance(&raw);
        prop_assert!(clean_grammar().is_match(&out), "{:?} -> {:?}", raw, out);
        prop_assert_eq!(normalize_utterance(&out), out.clone());
        let (before, after) = (count_tokens(&raw, "xxx"), count_tokens(&out, "xxx"));
        if raw.contains("[/]") {
            // a trailing retrace repeats its unit
            prop_assert!(after >= before);
        } else {
            prop_assert_eq!(before, after);
        }
    }

    #[test]
    fn arbitrary_text_never_panics(s in "\\PC{0,80}") {
        let _ = normalize_utterance(&s);
        let _ = parse_chat(&s, "X");
    }
}
